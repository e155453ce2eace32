#include "reid/harness.hpp"

int main(int argc, char** argv) { return reid::harness::cli(argc, argv); }
