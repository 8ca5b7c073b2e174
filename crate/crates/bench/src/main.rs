fn main() {
    std::process::exit(tomesd_bench::cli::main_with_args(std::env::args_os()));
}
