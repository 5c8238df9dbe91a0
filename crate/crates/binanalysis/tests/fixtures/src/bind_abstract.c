#include "fx.h"

static const char name[] = "cand.socket.ctrl";

int main(void)
{
    struct sockaddr_un addr;
    int fd = socket(AF_UNIX, SOCK_STREAM, 0);
    memset(&addr, 0, sizeof addr);
    addr.sun_family = AF_UNIX;
    addr.sun_path[0] = 0;
    strcpy(addr.sun_path + 1, name);
    bind(fd, &addr, SUN_OFF + 1 + strlen(name));
    listen(fd, 4);
    return 0;
}
