// SPDX-License-Identifier: MIT OR Apache-2.0

fn main() {
    std::process::exit(somnus_cli::run(std::env::args_os()));
}
