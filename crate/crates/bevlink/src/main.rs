fn main() { bevlink::cli::main(); }
