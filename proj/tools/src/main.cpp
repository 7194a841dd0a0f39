// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "voxformer/parallel.hpp"
#include "voxformer_app/app.hpp"

int main(int argc, char** argv) {
  voxformer::retain_freed_memory();
  return voxformer::app::run(argc, argv, std::cout, std::cerr);
}
