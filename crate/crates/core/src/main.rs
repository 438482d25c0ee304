// SPDX-License-Identifier: Apache-2.0

fn main() {
    std::process::exit(rdcmh::cli::run(std::env::args().collect()));
}
