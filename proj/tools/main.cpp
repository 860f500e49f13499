#include <malloc.h>

#include <iostream>

#include "m2m/cli/cli.hpp"

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return m2m::cli::run(argc, argv, std::cout, std::cerr);
}
