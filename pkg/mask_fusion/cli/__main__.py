import sys

from .main import run


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
