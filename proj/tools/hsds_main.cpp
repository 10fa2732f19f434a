#include "hsds/cli.hpp"

int main(int argc, char** argv) { return hsds::cli::run(argc, argv); }
