#include <iostream>

#include "gavatar/commands.hpp"

int main(int argc, char** argv)
{
    return gavatar::cli::run(argc, argv, std::cout, std::cerr);
}
