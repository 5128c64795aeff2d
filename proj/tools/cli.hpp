#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace spre::cli {

/// Runs one command line (without the program name). Results go to `out`;
/// failures are reported on `err` as a single-line JSON object and yield a
/// nonzero status.
int run(const std::vector<std::string>& args, std::ostream& out,
        std::ostream& err);

}  // namespace spre::cli
