#include <malloc.h>

#include "ddl/cli.hpp"

int main(int argc, char** argv) {
  // Keep large training buffers on the heap instead of fresh mmaps per step.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return ddl::cli::run(argc, argv);
}
