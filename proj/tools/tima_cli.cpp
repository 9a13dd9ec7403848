#include "tima/cli.hpp"

int main(int argc, char** argv) { return tima::run(argc, argv); }
