#include "spexplus/cli.hpp"

int main(int argc, char** argv) { return spexplus::cli::run(argc, argv); }
