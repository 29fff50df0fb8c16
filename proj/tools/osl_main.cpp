#include <iostream>
#include <string>
#include <vector>

#include "osl/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return osl::run_cli(args, std::cout, std::cerr);
}
