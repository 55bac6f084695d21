#include "commands.hpp"

int main(int argc, char** argv) { return lungcad::cli::run(argc, argv); }
