#pragma once

namespace promptpix {

// Exit codes: 0 success, 1 I/O or runtime failure, 2 usage, config or
// checkpoint incompatibility.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

int run_cli(int argc, char** argv);

}  // namespace promptpix
