// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

use clap::Parser;

use tanglefl::cli::{self, Cli};

fn main() {
    let threads = std::env::var("TANGLEFL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    if threads > 0 {
        // a failure here only means the global pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    std::process::exit(cli::execute(Cli::parse()));
}
