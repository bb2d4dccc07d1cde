#include "nnqn/cli.hpp"

int main(int argc, char** argv) { return nnqn::cli::run(argc, argv); }
