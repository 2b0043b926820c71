"""
q-space structure toolkit - Main executable script
"""

from main import main

if __name__ == "__main__":
    main()
