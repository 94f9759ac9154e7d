#include "dal/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return dal::run_cli(argc, argv, std::cout, std::cerr); }
