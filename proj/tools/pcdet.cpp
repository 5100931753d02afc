#include "pcd/cli.hpp"

int main(int argc, char** argv) { return pcd::cli::run(argc, argv); }
