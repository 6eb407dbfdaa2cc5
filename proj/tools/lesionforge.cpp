#include <iostream>
#include <string>
#include <vector>

#include "lesionforge/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return lesionforge::cli::run_cli(args, std::cout, std::cerr);
}
