use clap::Parser;
use reader_bench_cli::commands::{run, Cli};
use reader_bench_cli::error::{CliError, EXIT_OK};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            std::process::exit(EXIT_OK);
        }
        Err(e) => {
            let err = CliError::Usage(e.render().to_string().lines().next().unwrap_or("usage error").to_string());
            eprintln!("{}", err.to_json_line());
            std::process::exit(err.exit_code());
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("{}", e.to_json_line());
        std::process::exit(e.exit_code());
    }
}
