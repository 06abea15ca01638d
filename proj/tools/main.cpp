#include <iostream>

#include "mitr/cli.hpp"

int main(int argc, char** argv) {
  return mitr::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
