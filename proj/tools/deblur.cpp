#include "deblur/cli.hpp"

int main(int argc, char** argv) { return deblur::cli::run(argc, argv); }
