#include <iostream>
#include <string>
#include <vector>

#include "melhubert/pipeline.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return melhubert::run_cli(args, std::cout, std::cerr);
}
