#include <iostream>

#include "gmem/harness.hpp"

int main(int argc, char** argv) { return gmem::harness::run_main(argc, argv, std::cout, std::cerr); }
