#include <cstdio>

int main() {
    std::puts("idg: subcommands not wired yet");
    return 0;
}
