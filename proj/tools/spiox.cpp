#include "spiox/cli.hpp"

int main(int argc, char** argv) { return spiox::cli::run(argc, argv); }
