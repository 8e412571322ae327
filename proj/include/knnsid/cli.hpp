#pragma once

#include <iosfwd>

namespace knnsid::cli {

enum ExitCode : int {
    kOk = 0,
    kCheckFailed = 1,
    kUsage = 2,
    kDataError = 3,
    kIoError = 4,
};

/// Full command-line entry point. argv[0] is the program name.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace knnsid::cli
