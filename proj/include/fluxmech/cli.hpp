#pragma once

#include <string>

#include "fluxmech/config.hpp"

namespace fluxmech {

// Command-line dispatch. Exit codes: 0 success, 1 usage/input error, 2 fit
// failure or rejection exhaustion. Structured results go to --out, a short
// human summary to the other channel (stdout when --out is a file, stderr
// when results stream to stdout).
int run_cli(int argc, const char* const* argv);

// run-pipeline backend: reads every run directory under in_root (any child
// directory holding a meta.cfg), analyzes by run_type, writes results.json
// plus plot-ready CSVs into out_dir. Deterministic: identical inputs produce
// byte-identical outputs.
void run_full_pipeline(const std::string& in_root, const std::string& out_dir,
                       const FlatConfig& device);

} // namespace fluxmech
