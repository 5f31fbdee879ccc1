#include <string>
#include <vector>

#include "compatfam/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return compatfam::run_cli(args);
}
