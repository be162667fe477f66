#include <cstdio>
#include <string>
#include <vector>

#include "npx/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  const npx::CommandResult r = npx::cmd_dispatch(args);
  std::FILE* stream = r.exit_code == 0 ? stdout : stderr;
  std::fprintf(stream, "%s\n", r.summary.c_str());
  return r.exit_code;
}
