#include "kpp/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return kpp::cli::run({argv, argv + argc}, std::cout, std::cerr); }
