//! Time-interval encoders. Each maps the gaps `t̂ − τ` (seconds) of a
//! session's clicks to an `n × d` matrix that is added to the item rows.
//!
//! * `None`: zeros.
//! * `Tbe`: log₂ bucket lookup into a trainable `B × d` table.
//! * `T2v`: `[w₁t + b₁, sin(w₂t + b₂), …, sin(w_d t + b_d)]`.
//! * `Mte`: for each of `k` frequencies a block
//!   `[a₀, a₁cos(πt/ω), a₂sin(πt/ω), …, cos/sin(Jπt/ω)]` of width `2J + 1`.
//!   The trained quantity is the amplitude `a = √c`, which keeps `c ≥ 0`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{KsttError, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_BUCKETS: usize = 32;
pub const DEFAULT_FREQUENCIES: usize = 4;
pub const SECONDS_PER_WEEK: f64 = 7.0 * 86_400.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeEncoderKind {
    None,
    Tbe,
    T2v,
    Mte,
}

impl FromStr for TimeEncoderKind {
    type Err = KsttError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "tbe" => Ok(Self::Tbe),
            "t2v" => Ok(Self::T2v),
            "mte" => Ok(Self::Mte),
            other => Err(KsttError::Config(format!(
                "time_encoder must be none, tbe, t2v or mte, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for TimeEncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Tbe => "tbe",
            Self::T2v => "t2v",
            Self::Mte => "mte",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeEncoderConfig {
    pub kind: TimeEncoderKind,
    pub dim: usize,
    pub buckets: usize,
    pub frequencies: usize,
    /// Harmonics per frequency; `None` derives it from `dim` and `frequencies`.
    pub harmonics: Option<usize>,
}

impl TimeEncoderConfig {
    pub fn new(kind: TimeEncoderKind, dim: usize) -> Self {
        TimeEncoderConfig {
            kind,
            dim,
            buckets: DEFAULT_BUCKETS,
            frequencies: DEFAULT_FREQUENCIES,
            harmonics: None,
        }
    }

    /// The harmonic count `J` with `k(2J + 1) = d`.
    pub fn mte_harmonics(&self) -> Result<usize> {
        let (k, d) = (self.frequencies, self.dim);
        let j = match self.harmonics {
            Some(j) => j,
            None if k > 0 && d % k == 0 && (d / k) % 2 == 1 => (d / k - 1) / 2,
            None => {
                return Err(KsttError::Config(format!(
                    "mte: dim {d} is not frequencies {k} times an odd block width"
                )))
            }
        };
        if k == 0 || k * (2 * j + 1) != d {
            return Err(KsttError::Config(format!(
                "mte: frequencies {k} × (2·harmonics {j} + 1) must equal dim {d}"
            )));
        }
        Ok(j)
    }
}

/// Bucket of a gap: `clamp(⌊log₂(max(δ, 1))⌋, 0, B − 1)`.
pub fn tbe_bucket(delta_seconds: f64, buckets: usize) -> usize {
    let b = delta_seconds.max(1.0).log2().floor();
    (b as usize).min(buckets - 1)
}

#[derive(Clone, Debug)]
pub enum TimeEncoder {
    None {
        dim: usize,
    },
    Tbe {
        table: ParamId,
        buckets: usize,
    },
    T2v {
        w: ParamId,
        b: ParamId,
    },
    Mte {
        omega: ParamId,
        amplitude: ParamId,
        frequencies: usize,
        harmonics: usize,
    },
}

/// Encoder parameters bound to a tape.
#[derive(Clone, Debug)]
pub enum TimeVars {
    None,
    Tbe { table: Var },
    T2v { w: Var, b: Var },
    Mte { omega: Var, amplitude: Var },
}

impl TimeVars {
    pub fn vars(&self) -> Vec<Var> {
        match *self {
            TimeVars::None => vec![],
            TimeVars::Tbe { table } => vec![table],
            TimeVars::T2v { w, b } => vec![w, b],
            TimeVars::Mte { omega, amplitude } => vec![omega, amplitude],
        }
    }
}

impl TimeEncoder {
    /// Registers the encoder's parameters under `time.*`.
    ///
    /// T2V starts with `w₁ = 1/week` and sine periods spaced geometrically
    /// from 2 s to a week, `b = 0`. MTE periods `ω` are stored in weeks and
    /// start uniform in `[1 s, 1 week]`; amplitudes start at `1/√d`.
    pub fn init(store: &mut ParamStore, cfg: &TimeEncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.dim;
        match cfg.kind {
            TimeEncoderKind::None => Ok(TimeEncoder::None { dim: d }),
            TimeEncoderKind::Tbe => {
                if cfg.buckets == 0 {
                    return Err(KsttError::Config("tbe_buckets must be at least 1".into()));
                }
                let table = store.register("time.tbe", Tensor::xavier(cfg.buckets, d, rng))?;
                Ok(TimeEncoder::Tbe {
                    table,
                    buckets: cfg.buckets,
                })
            }
            TimeEncoderKind::T2v => {
                let mut w = vec![1.0 / SECONDS_PER_WEEK; d];
                let span = (SECONDS_PER_WEEK / 2.0).ln();
                for (i, wi) in w.iter_mut().enumerate().skip(1) {
                    let frac = if d > 2 { (i - 1) as f64 / (d - 2) as f64 } else { 0.0 };
                    *wi = 2.0 * PI / (2.0 * (span * frac).exp());
                }
                let w = store.register("time.t2v.w", Tensor::matrix(1, d, w)?)?;
                let b = store.register("time.t2v.b", Tensor::zeros(&[1, d]))?;
                Ok(TimeEncoder::T2v { w, b })
            }
            TimeEncoderKind::Mte => {
                let j = cfg.mte_harmonics()?;
                let k = cfg.frequencies;
                let omega: Vec<f64> = (0..k).map(|_| rng.gen_range(1.0 / SECONDS_PER_WEEK..1.0)).collect();
                let omega = store.register("time.mte.omega", Tensor::matrix(1, k, omega)?)?;
                let amplitude = store.register(
                    "time.mte.amplitude",
                    Tensor::full(&[1, d], 1.0 / (d as f64).sqrt()),
                )?;
                Ok(TimeEncoder::Mte {
                    omega,
                    amplitude,
                    frequencies: k,
                    harmonics: j,
                })
            }
        }
    }

    pub fn kind(&self) -> TimeEncoderKind {
        match self {
            TimeEncoder::None { .. } => TimeEncoderKind::None,
            TimeEncoder::Tbe { .. } => TimeEncoderKind::Tbe,
            TimeEncoder::T2v { .. } => TimeEncoderKind::T2v,
            TimeEncoder::Mte { .. } => TimeEncoderKind::Mte,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match *self {
            TimeEncoder::None { .. } => vec![],
            TimeEncoder::Tbe { table, .. } => vec![table],
            TimeEncoder::T2v { w, b } => vec![w, b],
            TimeEncoder::Mte { omega, amplitude, .. } => vec![omega, amplitude],
        }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> TimeVars {
        match *self {
            TimeEncoder::None { .. } => TimeVars::None,
            TimeEncoder::Tbe { table, .. } => TimeVars::Tbe {
                table: tape.param(store, table),
            },
            TimeEncoder::T2v { w, b } => TimeVars::T2v {
                w: tape.param(store, w),
                b: tape.param(store, b),
            },
            TimeEncoder::Mte { omega, amplitude, .. } => TimeVars::Mte {
                omega: tape.param(store, omega),
                amplitude: tape.param(store, amplitude),
            },
        }
    }

    /// Encodes `deltas` (seconds, one per click) as an `n × d` matrix.
    pub fn encode(&self, tape: &mut Tape, vars: &TimeVars, deltas: &[f64]) -> Result<Var> {
        let n = deltas.len();
        if n == 0 {
            return Err(KsttError::dim("time encoding", "no deltas"));
        }
        match (self, vars) {
            (TimeEncoder::None { dim }, TimeVars::None) => Ok(tape.constant(Tensor::zeros(&[n, *dim]))),
            (TimeEncoder::Tbe { buckets, .. }, TimeVars::Tbe { table }) => {
                let idx: Vec<usize> = deltas.iter().map(|&d| tbe_bucket(d, *buckets)).collect();
                tape.gather_rows(*table, &idx)
            }
            (TimeEncoder::T2v { .. }, TimeVars::T2v { w, b }) => {
                let t = tape.constant(Tensor::matrix(n, 1, deltas.to_vec())?);
                let wt = tape.matmul(t, *w)?;
                let lin = tape.add_row(wt, *b)?;
                let d = tape.value(lin).dims2().1;
                let head = tape.slice_cols(lin, 0, 1)?;
                if d == 1 {
                    return Ok(head);
                }
                let rest = tape.slice_cols(lin, 1, d - 1)?;
                let periodic = tape.sin(rest);
                tape.concat_cols(&[head, periodic])
            }
            (
                TimeEncoder::Mte {
                    frequencies,
                    harmonics,
                    ..
                },
                TimeVars::Mte { omega, amplitude },
            ) => {
                let (k, j) = (*frequencies, *harmonics);
                let width = 2 * j + 1;
                let d = k * width;
                // angle[:, m·width + slot] = t · (1/ω_m) · harmonic(slot) · π, t and ω in weeks
                let mut spread = vec![0.0; k * d];
                let mut cos_mask = vec![0.0; d];
                let mut sin_mask = vec![0.0; d];
                for m in 0..k {
                    cos_mask[m * width] = 1.0;
                    for h in 1..=j {
                        let (c, s) = (m * width + 2 * h - 1, m * width + 2 * h);
                        spread[m * d + c] = h as f64 * PI;
                        spread[m * d + s] = h as f64 * PI;
                        cos_mask[c] = 1.0;
                        sin_mask[s] = 1.0;
                    }
                }
                let weeks = deltas.iter().map(|d| d / SECONDS_PER_WEEK).collect();
                let t = tape.constant(Tensor::matrix(n, 1, weeks)?);
                let inv = tape.recip(*omega);
                let scaled = tape.matmul(t, inv)?;
                let spread = tape.constant(Tensor::matrix(k, d, spread)?);
                let angle = tape.matmul(scaled, spread)?;
                let cos = tape.cos(angle);
                let sin = tape.sin(angle);
                let cm = tape.constant(Tensor::matrix(1, d, cos_mask)?);
                let sm = tape.constant(Tensor::matrix(1, d, sin_mask)?);
                let cos = tape.mul_row(cos, cm)?;
                let sin = tape.mul_row(sin, sm)?;
                let basis = tape.add(cos, sin)?;
                tape.mul_row(basis, *amplitude)
            }
            _ => Err(KsttError::Contract("time encoder bound to mismatched variables".into())),
        }
    }

    /// Evaluation-mode encoding of plain values.
    pub fn encode_values(&self, store: &ParamStore, deltas: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, store);
        let out = self.encode(&mut tape, &vars, deltas)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::numerics::gradcheck;

    fn encoder(kind: TimeEncoderKind, dim: usize, seed: u64) -> (ParamStore, TimeEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = TimeEncoder::init(&mut store, &TimeEncoderConfig::new(kind, dim), &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn tbe_bucket_examples() {
        assert_eq!(tbe_bucket(8.0, 32), 3);
        assert_eq!(tbe_bucket(0.0, 32), 0);
        assert_eq!(tbe_bucket(0.4, 32), 0);
        assert_eq!(tbe_bucket(1e9, 32), 29);
        assert_eq!(tbe_bucket(1e12, 32), 31);
        assert_eq!(tbe_bucket(1e9, 8), 7);
    }

    #[test]
    fn tbe_bucket_matches_integer_log_on_a_million_deltas() {
        for delta in 1u64..=1_000_000 {
            // floor(log2(x)) for integer x is the index of its highest set bit
            let oracle = (63 - delta.leading_zeros()) as usize;
            assert_eq!(tbe_bucket(delta as f64, 32), oracle.min(31), "delta {delta}");
        }
    }

    #[test]
    fn tbe_is_piecewise_constant_and_discontinuous() {
        let (store, enc) = encoder(TimeEncoderKind::Tbe, 6, 1);
        let out = enc.encode_values(&store, &[16.0, 31.9, 32.0]).unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert_ne!(out.row(1), out.row(2));
    }

    #[test]
    fn null_encoder_is_zero() {
        let (store, enc) = encoder(TimeEncoderKind::None, 5, 0);
        let out = enc.encode_values(&store, &[0.0, 3.0, 1e6]).unwrap();
        assert_eq!(out.shape(), &[3, 5]);
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn every_encoder_returns_d_columns() {
        for kind in [TimeEncoderKind::None, TimeEncoderKind::Tbe, TimeEncoderKind::T2v, TimeEncoderKind::Mte] {
            let (store, enc) = encoder(kind, 12, 3);
            let out = enc.encode_values(&store, &[0.0, 5.0, 77.0, 1e7]).unwrap();
            assert_eq!(out.shape(), &[4, 12], "{kind}");
        }
    }

    #[test]
    fn t2v_examples() {
        let (store, enc) = encoder(TimeEncoderKind::T2v, 8, 0);
        let out = enc.encode_values(&store, &[0.0]).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
        let out = enc.encode_values(&store, &[1.0, 1e3, 123_456.0, 1e8]).unwrap();
        for i in 0..4 {
            assert!(out.row(i)[1..].iter().all(|x| (-1.0..=1.0).contains(x)));
        }
        // the linear component is unbounded
        assert!(out.get2(3, 0) > 1.0);
    }

    #[test]
    fn t2v_component_with_period_p_is_periodic() {
        let (mut store, enc) = encoder(TimeEncoderKind::T2v, 6, 0);
        let TimeEncoder::T2v { w, b } = enc else { unreachable!() };
        let periods = [0.0, 3.0, 17.5, 60.0, 3600.0, 86_400.0];
        for (i, p) in periods.iter().enumerate().skip(1) {
            store.get_mut(w).data_mut()[i] = 2.0 * PI / p;
            store.get_mut(b).data_mut()[i] = 0.3 * i as f64;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let t = rng.gen_range(0.0..1e5);
            for (i, p) in periods.iter().enumerate().skip(1) {
                let out = enc.encode_values(&store, &[t, t + p]).unwrap();
                assert!((out.get2(0, i) - out.get2(1, i)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn t2v_and_mte_are_continuous() {
        for kind in [TimeEncoderKind::T2v, TimeEncoderKind::Mte] {
            let (store, enc) = encoder(kind, 12, 9);
            for t in [1.0, 31.99, 32.0, 4096.0] {
                let out = enc.encode_values(&store, &[t, t + 1e-7]).unwrap();
                let jump = out.row(0).iter().zip(out.row(1)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(jump < 1e-6, "{kind} jumps {jump} at {t}");
            }
        }
    }

    #[test]
    fn mte_configuration() {
        let mut cfg = TimeEncoderConfig::new(TimeEncoderKind::Mte, 100);
        assert_eq!(cfg.mte_harmonics().unwrap(), 12);
        cfg.dim = 32;
        assert!(matches!(cfg.mte_harmonics(), Err(KsttError::Config(_))));
        cfg.frequencies = 32;
        assert_eq!(cfg.mte_harmonics().unwrap(), 0);
        cfg.frequencies = 4;
        cfg.harmonics = Some(3);
        assert!(cfg.mte_harmonics().is_err());
        cfg.dim = 28;
        assert_eq!(cfg.mte_harmonics().unwrap(), 3);
    }

    #[test]
    fn mte_at_zero_and_period() {
        let (store, enc) = encoder(TimeEncoderKind::Mte, 20, 2);
        let TimeEncoder::Mte { omega, amplitude, .. } = enc else { unreachable!() };
        let amp = store.get(amplitude).data().to_vec();
        let out = enc.encode_values(&store, &[0.0]).unwrap();
        for m in 0..4 {
            let block = &out.row(0)[m * 5..m * 5 + 5];
            assert_eq!(block[0], amp[m * 5]);
            assert_eq!(block[1], amp[m * 5 + 1]);
            assert_eq!(block[2], 0.0);
            assert_eq!(block[3], amp[m * 5 + 3]);
            assert_eq!(block[4], 0.0);
        }
        let omegas = store.get(omega).data().to_vec();
        for (m, w) in omegas.iter().enumerate() {
            let out = enc.encode_values(&store, &[123.0, 123.0 + 2.0 * w * SECONDS_PER_WEEK]).unwrap();
            for c in m * 5..m * 5 + 5 {
                assert!((out.get2(0, c) - out.get2(1, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mte_inner_products_are_translation_invariant() {
        // one frequency; cos and sin slots of each harmonic share a coefficient
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = TimeEncoderConfig {
            frequencies: 1,
            ..TimeEncoderConfig::new(TimeEncoderKind::Mte, 9)
        };
        let enc = TimeEncoder::init(&mut store, &cfg, &mut rng).unwrap();
        let TimeEncoder::Mte { amplitude, .. } = enc else { unreachable!() };
        let amp = store.get_mut(amplitude).data_mut();
        amp[0] = 0.5;
        for h in 1..=4 {
            let a = rng.gen_range(0.1..1.0);
            amp[2 * h - 1] = a;
            amp[2 * h] = a;
        }
        let ip = |a: f64, b: f64| {
            let out = enc.encode_values(&store, &[a, b]).unwrap();
            out.row(0).iter().zip(out.row(1)).map(|(x, y)| x * y).sum::<f64>()
        };
        for _ in 0..100 {
            let t1 = rng.gen_range(0.0..1e5);
            let t2 = rng.gen_range(0.0..1e5);
            let shift = rng.gen_range(0.0..1e5);
            let (a, b) = (ip(t1, t2), ip(t1 + shift, t2 + shift));
            let rel = (a - b).abs() / a.abs().max(b.abs());
            assert!(rel <= 1e-9, "{a} vs {b}");
        }
    }

    fn gradcheck_encoder(kind: TimeEncoderKind, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = TimeEncoderConfig {
            buckets: 6,
            frequencies: 2,
            ..TimeEncoderConfig::new(kind, 6)
        };
        let enc = TimeEncoder::init(&mut store, &cfg, &mut rng).unwrap();
        if let TimeEncoder::Mte { omega, .. } = enc {
            // periods of a few days against gaps of up to two days keep the
            // angles in a range where h = 1e-5 resolves them
            for w in store.get_mut(omega).data_mut() {
                *w = rng.gen_range(0.2..1.0);
            }
        }
        let span = if kind == TimeEncoderKind::Mte { 2.0 * 86_400.0 } else { 10.0 };
        let deltas: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..span)).collect();
        let c = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng);
        let forward = |s: &ParamStore, tape: &mut Tape| -> Result<Var> {
            let vars = enc.bind(tape, s);
            let out = enc.encode(tape, &vars, &deltas)?;
            let cv = tape.constant(c.clone());
            let prod = tape.mul(out, cv)?;
            let sq = tape.sum_squares(prod);
            let lin = tape.sum(prod);
            tape.add(sq, lin)
        };
        let report = gradcheck::check(
            &mut store,
            &enc.param_ids(),
            gradcheck::DEFAULT_STEP,
            |s| {
                let mut tape = Tape::new();
                let l = forward(s, &mut tape)?;
                Ok(tape.scalar_value(l))
            },
            |s| {
                let mut tape = Tape::new();
                let l = forward(s, &mut tape)?;
                tape.backward(l, s)
            },
        )
        .unwrap();
        report.max_rel_error
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        for kind in [TimeEncoderKind::Tbe, TimeEncoderKind::T2v, TimeEncoderKind::Mte] {
            for seed in 0..20 {
                let err = gradcheck_encoder(kind, seed);
                assert!(err <= 1e-4, "{kind} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn tbe_gradient_reaches_only_used_buckets() {
        let (mut store, enc) = encoder(TimeEncoderKind::Tbe, 3, 0);
        let mut tape = Tape::new();
        let vars = enc.bind(&mut tape, &store);
        let out = enc.encode(&mut tape, &vars, &[4.0, 5.0]).unwrap();
        let l = tape.sum(out);
        tape.backward(l, &mut store).unwrap();
        let TimeEncoder::Tbe { table, .. } = enc else { unreachable!() };
        let g = store.get(table).grad.clone().unwrap();
        for (i, row) in g.chunks(3).enumerate() {
            let expected = if i == 2 { 2.0 } else { 0.0 };
            assert!(row.iter().all(|&x| x == expected), "bucket {i}: {row:?}");
        }
    }

    proptest! {
        #[test]
        fn same_bucket_same_output(a in 1.0f64..1e7, frac in 0.0f64..1.0) {
            let b = a.log2().floor();
            let lo = b.exp2();
            let other = lo + frac * (2.0 * lo - lo) * 0.999;
            prop_assert_eq!(tbe_bucket(a, 32), tbe_bucket(other, 32));
        }
    }
}
