#include "subjectopt/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return subjectopt::run_cli(argc, argv, std::cout, std::cerr); }
