#include "cli.hpp"

int main(int argc, char** argv) { return evasim::cli::run({argv + 1, argv + argc}); }
