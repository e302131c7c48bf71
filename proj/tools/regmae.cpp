#include <iostream>

#include "regmae/cli.hpp"

int main(int argc, char** argv) {
  return regmae::cli::run({argv + 1, argv + argc}, std::cout, std::cerr);
}
