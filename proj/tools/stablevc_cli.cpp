#include "cli.hpp"

int main(int argc, char** argv) { return stablevc::cli::run(argc, argv); }
