#include "tsam/cli.hpp"

int main(int argc, char** argv) { return tsam::cli::run(argc, argv); }
