#include "steprag/cli.hpp"

int main(int argc, char** argv) { return steprag::run_command(argc, argv); }
