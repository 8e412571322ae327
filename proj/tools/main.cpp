#include <iostream>

#include "knnsid/cli.hpp"

int main(int argc, char** argv) {
    return knnsid::cli::run(argc, argv, std::cout, std::cerr);
}
