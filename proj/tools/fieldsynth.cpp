#include <iostream>
#include <string>
#include <vector>

#include "fieldsynth/cli.hpp"

int main(int argc, char** argv) {
  return fieldsynth::cli::run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
