#include <cstdio>
int main() { std::puts("cgrac placeholder"); return 2; }
