// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: validate, synth, prepare, train, eval, predict,
// transfer. Exit codes: 0 success, 1 configuration or user error, 2 internal
// error. SITSDECO_WORKERS overrides the worker/thread count.

#pragma once

#include <ostream>

namespace sitsdeco {

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace sitsdeco
