#include "bdl/cli.hpp"

int main(int argc, char** argv) { return bdl::cli::run(argc, argv); }
