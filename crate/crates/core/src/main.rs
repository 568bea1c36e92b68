fn main() {
    std::process::exit(lidar_jepa::cli::run(std::env::args_os()));
}
