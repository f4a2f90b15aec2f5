fn main() {
    std::process::exit(vtk::cli::dispatch(std::env::args_os()));
}
