#include "bodymetric/cli.hpp"

int main(int argc, char** argv) { return bodymetric::cli::run(argc, argv); }
