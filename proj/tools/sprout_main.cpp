#include "sprout/cli.hpp"

int main(int argc, char** argv) { return sprout::cli::run(argc, argv); }
