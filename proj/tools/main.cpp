#include <iostream>

#include "skattn/cli.hpp"

int main(int argc, char** argv) { return skattn::cli_run(argc, argv, std::cout, std::cerr); }
