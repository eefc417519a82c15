#pragma once

namespace attnwb::cli {

// Exit status: 0 success, 1 runtime failure, 2 bad config or usage.
int run(int argc, char** argv);

}  // namespace attnwb::cli
