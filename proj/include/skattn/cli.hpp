#pragma once

#include <iosfwd>

namespace skattn {

/// Subcommands: train, reenact, bench-attn, grad-check, raster-golden, self-test.
/// Returns 0 on success, 1 when a check fails, 2 on invalid arguments.
int cli_run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace skattn
