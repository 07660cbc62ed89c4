// SPDX-License-Identifier: MIT OR Apache-2.0

fn main() {
    std::process::exit(nmri::cli::main(std::env::args_os()));
}
