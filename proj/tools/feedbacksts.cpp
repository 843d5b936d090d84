#include "feedbacksts/commands.hpp"

int main(int argc, char** argv) { return fsts::run_cli(argc, argv); }
