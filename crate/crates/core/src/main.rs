fn main() {
    std::process::exit(lora_eraser::cli::main());
}
