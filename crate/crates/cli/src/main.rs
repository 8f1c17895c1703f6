use liftdepth_cli::{run, SEED_ENV};

fn main() {
    let seed = std::env::var(SEED_ENV).ok();
    let code = run(std::env::args_os(), seed.as_deref(), &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
