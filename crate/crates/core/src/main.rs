use clap::Parser;

use evtach::cli::{self, Cli};

fn main() {
    let cli = Cli::parse();
    cli::init_logging(cli.verbose);
    std::process::exit(cli::run(cli));
}
