#include "lmk/cli.hpp"

int main(int argc, char** argv) {
    return lmk::run_cli(std::vector<std::string>(argv, argv + argc));
}
