#include <iostream>

#include "rattn/cli.hpp"

int main(int argc, char** argv) { return rattn::run_command(argc, argv, std::cout, std::cerr); }
