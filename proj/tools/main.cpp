#include "uvseg/cli.hpp"

int main(int argc, char** argv)
{
    return uvs::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
