#include "fx.h"

int main(void)
{
    const char *v = getenv("ANDROID_SOCKET_cnd");
    if (!v)
        return 1;
    int fd = atoi(v);
    listen(fd, 4);
    const char *p = getenv("PATH");
    return p != 0;
}
