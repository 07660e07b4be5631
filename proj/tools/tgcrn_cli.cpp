#include <iostream>

#include "tgcrn/cli.hpp"

int main(int argc, char** argv) { return tgcrn::cli::run(argc, argv, std::cout, std::cerr); }
