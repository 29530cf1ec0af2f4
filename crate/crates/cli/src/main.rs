use clap::Parser;
use innlab::Cli;

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // Caps parallelism only; every result is identical at any width.
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .ok();
    }
    if let Err(e) = innlab::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
