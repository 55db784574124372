use clap::Parser;

fn main() {
    std::process::exit(sharc_cli::main_with(sharc_cli::Cli::parse()));
}
