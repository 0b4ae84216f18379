#include <iostream>
#include <string>
#include <vector>

#include "twophase/experiment.hpp"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  return twophase::run_cli(args, std::cout, std::cerr);
}
