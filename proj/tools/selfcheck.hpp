#pragma once

#include <ostream>

namespace dvps::cli {

/// Runs the built-in verification suites (gradients, assignment oracle,
/// metric identities) and prints one line per suite with the worst observed
/// error. Returns true when every suite passes. Setting DVPS_SELFCHECK_FAULT
/// injects a known fault to exercise the failure path.
bool run_selfcheck(std::ostream& out);

}  // namespace dvps::cli
