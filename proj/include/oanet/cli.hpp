#pragma once

// CLI dispatch. Placeholder during bring-up; subcommands land with the
// pipeline modules.

#include <cstdio>

#include "oanet/common.hpp"

namespace oanet::cli {

inline int dispatch(int argc, char** argv) {
    (void)argc;
    (void)argv;
    std::printf("oanet %s\n", std::string(kVersion).c_str());
    return 0;
}

}  // namespace oanet::cli
