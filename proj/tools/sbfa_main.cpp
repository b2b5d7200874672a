#include <string>
#include <vector>

#include "sbfa/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return sbfa::run_cli(args);
}
