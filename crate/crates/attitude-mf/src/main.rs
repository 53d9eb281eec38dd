use attitude_mf::cli;

fn main() {
    std::process::exit(cli::run());
}
