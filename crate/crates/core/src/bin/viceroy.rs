fn main() {
    viceroy::cli::main()
}
