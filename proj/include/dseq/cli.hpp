#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "dseq/config.hpp"

DSEQ_BEGIN_NAMESPACE

/// Exit codes of the dseq binary.
inline constexpr int kExitOk = 0;
inline constexpr int kExitDomainError = 1;
inline constexpr int kExitUsage = 2;

/// Parses `args` (args[0] is the program name) and runs one subcommand.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv);

DSEQ_END_NAMESPACE
