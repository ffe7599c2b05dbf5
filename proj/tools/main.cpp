#include "xane3/cli/cli.hpp"

int main(int argc, char** argv) { return xane3::cli::run(argc, argv); }
