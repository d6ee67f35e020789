#pragma once

namespace partmim {

/// Exit codes: 0 success, 2 usage or config error, 3 numerical or check failure.
int run_cli(int argc, const char* const* argv);

}  // namespace partmim
