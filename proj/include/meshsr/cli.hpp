#pragma once

#include <string>
#include <vector>

// Command-line front end: dataset generation, training, evaluation,
// HR-subset selection, and loss-landscape probing, each as one deterministic
// run that leaves a manifest (command, config echo, seed, dataset
// fingerprint, timestamps, artifact paths) in its output directory.

namespace meshsr::cli {

// Runs one invocation; `args` excludes the program name. Never throws.
// Exit codes: 0 success, 2 configuration or validation failure, 3 solver
// non-convergence or training divergence, 4 I/O or file-format failure,
// 1 anything unexpected.
int run_cli(std::vector<std::string> args);

}  // namespace meshsr::cli
