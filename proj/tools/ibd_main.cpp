#include <iostream>

#include "ibd/run.hpp"

int main(int argc, char** argv) {
  return ibd::run_command({argv + 1, argv + argc}, std::cout, std::cerr);
}
