#include "fx.h"

#define CAM_SOCK "/data/misc/camera/cam_socket"

int main(void)
{
    struct sockaddr_un addr;
    umask(0);
    int fd = socket(AF_UNIX, SOCK_STREAM, 0);
    memset(&addr, 0, sizeof addr);
    addr.sun_family = AF_UNIX;
    snprintf(addr.sun_path, sizeof addr.sun_path, "%s", CAM_SOCK);
    if (bind(fd, &addr, sizeof addr) < 0)
        return 1;
    chmod(CAM_SOCK, 0666);
    fchown(fd, 1000, 3003);
    listen(fd, 4);
    for (;;)
        close(accept(fd, 0, 0));
}
