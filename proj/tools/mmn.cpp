#include "mmn/cli.hpp"

int main(int argc, char** argv) { return mmn::cli::run(argc, argv); }
