use std::io;

use kstt::cli::{run, Streams};

fn main() {
    let (stdin, stdout, stderr) = (io::stdin(), io::stdout(), io::stderr());
    let mut streams = Streams {
        stdin: &mut stdin.lock(),
        stdout: &mut stdout.lock(),
        stderr: &mut stderr.lock(),
    };
    let code = run(std::env::args_os(), &mut streams);
    std::process::exit(code);
}
