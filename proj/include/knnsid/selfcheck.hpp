#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace knnsid::check {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct SelfcheckOptions {
    bool quick = false;
    std::uint64_t seed = 7;
    /// Name of a check to sabotage (negative control); empty for none.
    std::string inject_fault;
};

std::vector<CheckResult> run_selfchecks(const SelfcheckOptions& options);

} // namespace knnsid::check
