#include "dsarf/cli.hpp"

int main(int argc, char** argv) { return dsarf::cli::cli_main(argc, argv); }
